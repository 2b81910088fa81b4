//! Command-line definitions and dispatch.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use progseg::model::{BackboneKind, ExtendInit, ModelCheckpoint};
use progseg::patchify::{load_patch_set, PatchConfig, Split};
use progseg::preprocess::{ClaheParams, NormalizeParams};
use progseg::raster::{self, parse_band_set, BandId, LabelMask};
use progseg::synth::{generate_dataset, SceneParams};
use progseg::train::{evaluate, predict_map, PatchDir, PatchSource};

use crate::config::{ExperimentConfig, PlanConfig, StageEntry};
use crate::error::CliError;
use crate::pipeline::{self, RunManifest, RunStatus};
use crate::render;

#[derive(Debug, Parser)]
#[command(name = "progseg", version, about = "Progressive patch-size segmentation of irrigation systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled dataset.
    Synth(SynthArgs),
    /// Percentile-normalize and CLAHE-equalize a tile directory.
    Preprocess(PreprocessArgs),
    /// Cut tiles into filtered patch sets with a tile-level split.
    Patchify(PatchifyArgs),
    /// Train a progressive plan on patch sets.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a validation manifest.
    Eval(EvalArgs),
    /// Predict a class map for one image.
    Predict(PredictArgs),
    /// Compare completed runs.
    Report(ReportArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
}

fn parse_bands(s: &str) -> Result<Vec<BandId>, CliError> {
    parse_band_set(s).map_err(|e| CliError::config(e.to_string()))
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X', ',']).unwrap_or((s, s));
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad grid '{s}': {e}"));
    Ok((p(r)?, p(c)?))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub tiles: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Make FLOOD separable from background only in NIR.
    #[arg(long)]
    pub nir_only: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Tile side in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long)]
    pub pivots: Option<usize>,
    #[arg(long)]
    pub floods: Option<usize>,
    #[arg(long)]
    pub noise: Option<f32>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Band set, e.g. `RGBN`, `all` or `RED,GREEN,NIR`.
    #[arg(long, visible_alias = "channels", default_value = "all")]
    pub bands: String,
    #[arg(long, default_value_t = 2.0)]
    pub p_low: f64,
    #[arg(long, default_value_t = 98.0)]
    pub p_high: f64,
    #[arg(long, default_value_t = 0.01)]
    pub clahe_clip: f64,
    /// Tile grid as ROWSxCOLS.
    #[arg(long, default_value = "8x8", value_parser = parse_grid)]
    pub clahe_grid: (usize, usize),
    #[arg(long, default_value_t = 256)]
    pub clahe_bins: usize,
    #[arg(long)]
    pub no_clahe: bool,
}

#[derive(Debug, Args)]
pub struct PatchifyArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// One or more patch sizes.
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    pub size: Vec<usize>,
    #[arg(long, default_value_t = progseg::patchify::PATCH_OTHER_THRESHOLD)]
    pub other_threshold: f64,
    #[arg(long, default_value_t = progseg::patchify::TILE_OTHER_THRESHOLD)]
    pub tile_threshold: f64,
    #[arg(long, default_value_t = 0.2)]
    pub val_ratio: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Band set, e.g. `RGBN`, `all` or `RED,GREEN,NIR`.
    #[arg(long, visible_alias = "channels", default_value = "all")]
    pub bands: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding `patches_<S>/manifest.jsonl` per stage size.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Model, stage, augmentation and loss settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Stage patch sizes, e.g. `64,128,256`.
    #[arg(long, value_delimiter = ',')]
    pub plan: Option<Vec<usize>>,
    /// Band set, e.g. `RGBN`, `all` or `RED,GREEN,NIR`.
    #[arg(long, visible_alias = "channels")]
    pub bands: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub frozen_epochs: Option<usize>,
    #[arg(long)]
    pub finetune_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_head: Option<f64>,
    #[arg(long)]
    pub lr_base: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub head_width: Option<usize>,
    #[arg(long)]
    pub init_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub extend_init: Option<ExtendInit>,
    /// Overwrite a completed training output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Patch manifest; its VAL entries are evaluated.
    #[arg(long)]
    pub val: PathBuf,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Class-code mask PNG; a colored `*.preview.png` is written beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tile_size: Option<usize>,
    #[arg(long)]
    pub no_clahe: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories, or directories containing runs.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Band set, e.g. `RGBN`, `all` or `RED,GREEN,NIR`.
    #[arg(long, visible_alias = "channels")]
    pub bands: Option<String>,
    /// Stage patch sizes, e.g. `64,128,256`.
    #[arg(long, value_delimiter = ',')]
    pub plan: Option<Vec<usize>>,
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Patchify(a) => patchify(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Report(a) => {
            let written = crate::report::write_report(&a.runs, &a.out).map_err(|e| e.at("report"))?;
            for p in written {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Run(a) => run(a),
    }
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let d = SceneParams::default();
    let params = SceneParams {
        size: (a.size, a.size),
        nir_only_class: a.nir_only,
        n_pivots: a.pivots.unwrap_or(d.n_pivots),
        n_floods: a.floods.unwrap_or(d.n_floods),
        noise_sigma: a.noise.unwrap_or(d.noise_sigma),
        ..d
    };
    let m = generate_dataset(a.tiles, &params, a.seed, &a.out).map_err(|e| CliError::from(e).at("synth"))?;
    println!("wrote {} tiles to {}", m.tiles.len(), a.out.display());
    Ok(())
}

fn preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    let norm = NormalizeParams {
        p_low: a.p_low,
        p_high: a.p_high,
        ..NormalizeParams::default()
    };
    let clahe = ClaheParams {
        clip_limit: a.clahe_clip,
        tile_grid: a.clahe_grid,
        n_bins: a.clahe_bins,
        bands: None,
    };
    let tiles = pipeline::load_tiles(&a.input, &parse_bands(&a.bands)?).map_err(|e| e.at("preprocess"))?;
    let n = tiles.len();
    let tiles = pipeline::preprocess_tiles(tiles, &norm, (!a.no_clahe).then_some(&clahe)).map_err(|e| e.at("preprocess"))?;
    pipeline::save_tiles(&a.out, &tiles)?;
    println!("preprocessed {n} tiles into {}", a.out.display());
    Ok(())
}

fn patchify(a: PatchifyArgs) -> Result<(), CliError> {
    let cfg = PatchConfig {
        tile_other_threshold: a.tile_threshold,
        patch_other_threshold: a.other_threshold,
        val_ratio: a.val_ratio,
        seed: a.seed,
    };
    let manifests = pipeline::patchify_dir(&a.input, &a.out, &parse_bands(&a.bands)?, &a.size, &cfg).map_err(|e| e.at("patchify"))?;
    for m in manifests {
        println!("{}", m.display());
    }
    Ok(())
}

/// Experiment settings for `train`: the config file if given, then flags.
fn train_config(a: &TrainArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.out_dir = a.out.clone();
    if let Some(b) = &a.bands {
        cfg.bands = b.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.alpha {
        cfg.loss.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.loss.beta = v;
    }
    if a.no_augment {
        cfg.augment.enabled = false;
    }
    if let Some(b) = a.backbone {
        cfg.model.backbone = b;
    }
    if let Some(w) = &a.widths {
        cfg.model.widths = w.clone();
    }
    if let Some(w) = a.head_width {
        cfg.model.head.width = w;
    }
    let mut plan = cfg.plan.take().unwrap_or_default();
    if let Some(sizes) = &a.plan {
        let template = plan.stages.first().cloned().unwrap_or_default();
        plan = PlanConfig {
            init_checkpoint: plan.init_checkpoint.clone(),
            extend_init: plan.extend_init,
            ..PlanConfig::from_sizes(sizes, &template)
        };
    }
    for s in plan.stages.iter_mut() {
        let apply = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        apply(&mut s.frozen_epochs, a.frozen_epochs);
        apply(&mut s.finetune_epochs, a.finetune_epochs);
        apply(&mut s.batch_size, a.batch_size);
        apply(&mut s.early_stop_patience, a.patience);
        if let Some(v) = a.lr_head {
            s.lr_head = v;
        }
        if let Some(v) = a.lr_base {
            s.lr_base = v;
        }
    }
    if let Some(c) = &a.init_ckpt {
        plan.init_checkpoint = Some(c.clone());
    }
    if let Some(e) = a.extend_init {
        plan.extend_init = e;
    }
    cfg.plan = Some(plan);
    // Data come from the patch directory; the data section is unused.
    cfg.data.synth = None;
    cfg.data.tiles_dir = Some(a.data.clone());
    Ok(cfg)
}

fn guard_completed(out: &Path, force: bool) -> Result<(), CliError> {
    if let Some(m) = RunManifest::load(out) {
        if m.status == RunStatus::Complete && !force {
            return Err(CliError::config(format!("{} already holds a completed run; pass --force", out.display())));
        }
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let cfg = train_config(&a)?;
    cfg.validate()?;
    guard_completed(&a.out, a.force)?;
    let bands = cfg.band_set()?;
    let plan = cfg.stage_plan()?;
    let spec = cfg.model_spec()?;
    let source = PatchDir(a.data.clone());
    let mut sets = BTreeMap::new();
    for st in &plan.stages {
        for split in [Split::Train, Split::Val] {
            let set = source.patch_set(st.patch_size, split, &bands).map_err(|e| CliError::from(e).at("load patches"))?;
            sets.insert((st.patch_size, split), set);
        }
    }
    let p = cfg.plan.as_ref().expect("set by train_config");
    let init = pipeline::model_init(&spec, p.init_checkpoint.as_deref(), p.extend_init, &bands)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(pipeline::CONFIG_COPY), cfg.to_toml()?)?;
    let outcome = pipeline::train_and_record(&plan, &sets, &init, &bands, &cfg.loss, cfg.seed, &a.out)?;
    let mut artifacts: Vec<PathBuf> = vec![PathBuf::from(pipeline::CONFIG_COPY)];
    artifacts.extend(outcome.artifacts.iter().map(|p| p.strip_prefix(&a.out).unwrap_or(p).to_path_buf()));
    let manifest = RunManifest {
        status: RunStatus::Complete,
        config_digest: String::new(),
        artifacts,
    };
    fs::write(a.out.join(pipeline::RUN_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("{}", serde_json::to_string_pretty(&outcome.metrics)?);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let ckpt = ModelCheckpoint::load(&a.ckpt).map_err(|e| CliError::from(e).at("load checkpoint"))?;
    let val = load_patch_set(&a.val, Split::Val, &ckpt.bands).map_err(|e| CliError::from(e).at("load patches"))?;
    let model = ckpt.to_model()?;
    let report = evaluate(&model, &val).map_err(|e| CliError::from(e).at("eval"))?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    if let Some(out) = &a.out {
        fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn predict(a: PredictArgs) -> Result<(), CliError> {
    let ckpt = ModelCheckpoint::load(&a.ckpt).map_err(|e| CliError::from(e).at("load checkpoint"))?;
    let img = raster::load_raster(&a.image, &ckpt.bands).map_err(|e| CliError::from(e).at("load image"))?;
    let clahe = ClaheParams::default();
    let img = pipeline::preprocess_image(&img, &NormalizeParams::default(), (!a.no_clahe).then_some(&clahe))?;
    let model = ckpt.to_model()?;
    let tile = a.tile_size.or_else(|| ckpt.stage_history.last().map(|s| s.0)).unwrap_or(img.height());
    let mask: LabelMask = predict_map(&model, &img, tile).map_err(|e| CliError::from(e).at("predict"))?;
    let preview = a.out.with_extension("preview.png");
    render::write_mask_png(&a.out, &mask)?;
    render::write_preview_png(&preview, &mask)?;
    println!("{} ({})", a.out.display(), render::class_legend());
    println!("{}", preview.display());
    Ok(())
}

fn run(a: RunArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    cfg.resolve_paths(a.config.parent().unwrap_or(Path::new(".")));
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = a.out {
        cfg.out_dir = o;
    }
    if let Some(b) = a.bands {
        cfg.bands = b;
    }
    if let Some(sizes) = a.plan {
        let mut plan = cfg.plan.take().unwrap_or_default();
        let template = plan.stages.first().cloned().unwrap_or_else(StageEntry::default);
        plan.stages = PlanConfig::from_sizes(&sizes, &template).stages;
        cfg.plan = Some(plan);
    }
    let summary = pipeline::run_pipeline(&cfg, a.force)?;
    println!("{}", serde_json::to_string_pretty(&summary.metrics)?);
    println!("artifacts in {}", summary.out_dir.display());
    Ok(())
}
