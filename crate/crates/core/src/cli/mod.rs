//! The `ldc` command line.

mod render;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_bytes, write_json, Dataset, Splits};
use crate::error::{Error, Result};
use crate::grid::write_grid;
use crate::labelgen::{generate_labels, Guide, LabelGenConfig, MaskShape};
use crate::metrics::{evaluate, EvalConfig};
use crate::model::{read_checkpoint, train, write_checkpoint, ModelConfig, Network, ParamStore, Sample, TrainConfig};
use crate::par;
use crate::pipeline::{infer_image, padded_dims, validation_f1, ThresholdMode};
use crate::postprocess::{CenterMode, Connectivity, ImagePredictions, PostprocessConfig, PredictionsFile, ScoreMode};
use crate::synth::{gen_dataset, SceneConfig};

pub use render::render_overlay;

/// Environment variable that overrides every seed option.
pub const SEED_ENV: &str = "LDC_SEED";

#[derive(Debug, Parser)]
#[command(name = "ldc", version, about = "Crowd localization, counting and head detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    Synth(SynthArgs),
    /// Write confidence and size label grids for a dataset.
    GenLabels(GenLabelsArgs),
    /// Train a model and write checkpoint, config and logs.
    Train(TrainArgs),
    /// Run a trained model over a dataset and write predictions.
    Infer(InferArgs),
    /// Score predictions against a dataset's annotations.
    Eval(EvalArgs),
    /// Draw predictions over the images as PPM files.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub images: usize,
    #[arg(long, default_value_t = 1.0 / 12.0)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 1.0 / 12.0)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 5)]
    pub min_heads: usize,
    #[arg(long, default_value_t = 15)]
    pub max_heads: usize,
    #[arg(long, default_value_t = 2.0)]
    pub min_radius: f64,
    #[arg(long, default_value_t = 6.0)]
    pub max_radius: f64,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
    /// Fraction of heads drawn at half contrast.
    #[arg(long, default_value_t = 0.0)]
    pub low_contrast_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MaskArg {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Dataset preset for the maximum blob size (nwpu, shha, shhb, qnrf, fdst).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub max_size: Option<f64>,
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long, value_enum, default_value_t = MaskArg::Rectangle)]
    pub mask: MaskArg,
}

impl LabelArgs {
    fn config(&self) -> Result<LabelGenConfig> {
        let mut cfg = match &self.preset {
            Some(name) => LabelGenConfig::for_dataset(name)
                .ok_or_else(|| Error::argument(format!("unknown dataset preset `{name}`")))?,
            None => LabelGenConfig::default(),
        };
        if let Some(c) = self.max_size {
            cfg.max_size = c;
        }
        if let Some(r) = self.ratio {
            cfg.ratio = r;
        }
        cfg.mask_shape = match self.mask {
            MaskArg::Rectangle => MaskShape::Rectangle,
            MaskArg::Ellipse => MaskShape::Ellipse,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct GenLabelsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub labels: LabelArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Output directory for `model.ldcp`, `model.json` and the logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Start from the short single-core recipe instead of the defaults.
    #[arg(long)]
    pub desk_scale: bool,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_binarization: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub crop: Option<usize>,
    /// Supervise size on ground-truth foreground pixels only.
    #[arg(long)]
    pub size_foreground_only: bool,
    /// Let the size loss update the shared extractor.
    #[arg(long)]
    pub size_into_extractor: bool,
    #[arg(long)]
    pub no_flip: bool,
    #[arg(long)]
    pub no_scale: bool,
    #[arg(long, default_value_t = 250)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub labels: LabelArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ConnectivityArg {
    #[value(name = "4")]
    Four,
    #[value(name = "8")]
    Eight,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScoreArg {
    Center,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CenterArg {
    Centroid,
    Box,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Binarize with one global threshold instead of the learned map.
    #[arg(long)]
    pub fixed_threshold: Option<f64>,
    /// Also write confidence, threshold, binary and size grids here.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ConnectivityArg::Eight)]
    pub connectivity: ConnectivityArg,
    #[arg(long, value_enum, default_value_t = ScoreArg::Center)]
    pub score: ScoreArg,
    #[arg(long, value_enum, default_value_t = CenterArg::Centroid)]
    pub center: CenterArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Report path stem; `.json` and `.csv` are written.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Match radius for point-only annotations.
    #[arg(long, default_value_t = 8.0)]
    pub radius: f64,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8.0)]
    pub radius: f64,
}

fn seed_override(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::argument(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(seed),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::GenLabels(a) => cmd_gen_labels(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Render(a) => cmd_render(&a),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SceneConfig {
        width: a.width,
        height: a.height,
        count: (a.min_heads, a.max_heads),
        radius: (a.min_radius, a.max_radius),
        noise: a.noise,
        low_contrast_fraction: a.low_contrast_fraction,
        seed: seed_override(a.seed)?,
        ..SceneConfig::default()
    };
    let sizes = gen_dataset(&cfg, a.images, a.val_fraction, a.test_fraction, &LabelGenConfig::default(), &a.out)?;
    write_json(&a.out.join("scene.json"), &cfg)?;
    println!(
        "wrote {} train / {} val / {} test images to {}",
        sizes.train,
        sizes.val,
        sizes.test,
        a.out.display()
    );
    Ok(())
}

fn cmd_gen_labels(a: &GenLabelsArgs) -> Result<()> {
    let cfg = a.labels.config()?;
    let ds = Dataset::open(&a.data)?;
    let labels = par::try_map(&ds.annotations, |ann| generate_labels(ann, &cfg))?;
    let mut blobs = 0;
    let mut box_guided = 0;
    for (ann, l) in ds.annotations.iter().zip(&labels) {
        ds.write_labels(&ann.image_id, &l.confidence, &l.size)?;
        blobs += l.sizes.len();
        if l.guide == Guide::Box {
            box_guided += 1;
        }
    }
    let n = ds.annotations.len();
    info!("{box_guided} images box-guided, {} point-guided", n - box_guided);
    println!("{n} images, {blobs} blobs, {} grid files", 2 * n);
    Ok(())
}

fn load_samples(ds: &Dataset) -> Result<Vec<Sample>> {
    par::try_map(&ds.annotations, |ann| {
        let image = ds.read_image(&ann.image_id)?;
        if (image.height, image.width) != (ann.height, ann.width) {
            return Err(Error::shape(format!(
                "{}: image is {}x{}, annotation says {}x{}",
                ann.image_id, image.height, image.width, ann.height, ann.width
            )));
        }
        Ok(Sample {
            image,
            annotation: ann.clone(),
        })
    })
}

/// Trained model as stored on disk: checkpoint plus its architecture.
pub fn load_model(dir: &Path) -> Result<(Network, ParamStore)> {
    let config: ModelConfig = read_json(&dir.join("model.json"))?;
    let store = read_checkpoint(&dir.join("model.ldcp"))?;
    Network::with_params(config, &store)
}

pub fn save_model(dir: &Path, config: &ModelConfig, params: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("model.json"), config)?;
    write_checkpoint(&dir.join("model.ldcp"), params)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let seed = seed_override(a.seed)?;
    let labels = a.labels.config()?;
    let train_ds = Dataset::open(&a.train)?;
    let val_ds = Dataset::open(&a.val)?;
    let train_set = load_samples(&train_ds)?;
    let val_set = load_samples(&val_ds)?;
    let in_channels = train_set.first().map_or(1, |s| s.image.channels);

    let model_cfg = ModelConfig {
        in_channels,
        seed,
        ..ModelConfig::default()
    };
    let mut cfg = if a.desk_scale {
        TrainConfig::desk_scale()
    } else {
        TrainConfig::default()
    };
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    cfg.batch_size = a.batch.unwrap_or(cfg.batch_size);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.lr_binarization = a.lr_binarization.unwrap_or(cfg.lr_binarization);
    cfg.lambda = a.lambda.unwrap_or(cfg.lambda);
    cfg.crop = a.crop.unwrap_or(cfg.crop);
    cfg.size_foreground_only |= a.size_foreground_only;
    cfg.size_into_extractor |= a.size_into_extractor;
    cfg.flip &= !a.no_flip;
    cfg.scale_aug &= !a.no_scale;
    cfg.eval_every = a.eval_every;
    cfg.seed = seed;
    let (net, init) = Network::new(model_cfg.clone())?;
    let validate = |p: &ParamStore| validation_f1(&net, p, &val_set);
    let outcome = match train(&net, init, &train_set, &labels, &cfg, &validate) {
        Ok(o) => o,
        Err(Error::Diverged { iteration, last_good }) => {
            save_model(&a.out.join("last_good"), &model_cfg, &last_good)?;
            return Err(Error::Diverged { iteration, last_good });
        }
        Err(e) => return Err(e),
    };
    save_model(&a.out, &model_cfg, &outcome.best)?;
    write_json(&a.out.join("train.json"), &cfg)?;
    write_bytes(&a.out.join("train_log.csv"), outcome.log.to_csv().as_bytes())?;
    write_bytes(&a.out.join("validation.csv"), outcome.log.validation_csv().as_bytes())?;
    println!(
        "best validation F1-m {:.4} at iteration {}; model written to {}",
        outcome.best_score,
        outcome.best_iteration,
        a.out.display()
    );
    Ok(())
}

/// Images whose dims were padded to a multiple of 4 for inference.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PaddingSidecar {
    pub padded: Vec<PaddedImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaddedImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub padded_width: usize,
    pub padded_height: usize,
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".padding.json");
    out.with_file_name(name)
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    if let Some(t) = a.fixed_threshold {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::argument(format!("fixed threshold {t} outside [0, 1]")));
        }
    }
    let (net, params) = load_model(&a.model)?;
    let ds = Dataset::open(&a.data)?;
    let post = PostprocessConfig {
        connectivity: match a.connectivity {
            ConnectivityArg::Four => Connectivity::Four,
            ConnectivityArg::Eight => Connectivity::Eight,
        },
        score: match a.score {
            ScoreArg::Center => ScoreMode::Center,
            ScoreArg::Mean => ScoreMode::Mean,
        },
        center: match a.center {
            CenterArg::Centroid => CenterMode::Centroid,
            CenterArg::Box => CenterMode::BoxCenter,
        },
    };
    let mode = a.fixed_threshold.map_or(ThresholdMode::Learned, ThresholdMode::Fixed);
    let samples = load_samples(&ds)?;
    let results = par::try_map(&samples, |s| infer_image(&net, &params, &s.image, mode, &post))?;

    let mut file = PredictionsFile::default();
    let mut sidecar = PaddingSidecar::default();
    for (s, inf) in samples.iter().zip(&results) {
        let id = &s.annotation.image_id;
        if inf.outputs.confidence.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: format!("confidence map of {id}"),
            });
        }
        file.images.push(ImagePredictions::from_prediction(id, &inf.prediction));
        let (h, w) = (s.image.height, s.image.width);
        let (ph, pw) = padded_dims(h, w);
        if (ph, pw) != (h, w) {
            sidecar.padded.push(PaddedImage {
                id: id.clone(),
                width: w,
                height: h,
                padded_width: pw,
                padded_height: ph,
            });
        }
        if let Some(dir) = &a.maps {
            let maps = [
                ("conf", &inf.outputs.confidence),
                ("threshold", &inf.threshold),
                ("binary", &inf.binary),
                ("size", &inf.outputs.size),
            ];
            for (kind, g) in maps {
                let sub = dir.join(kind);
                std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                write_grid(&sub.join(format!("{id}.ldcg")), g)?;
            }
        }
    }
    write_json(&a.out, &file)?;
    if !sidecar.padded.is_empty() {
        write_json(&sidecar_path(&a.out), &sidecar)?;
        info!("{} images padded to a multiple of 4", sidecar.padded.len());
    }
    let total: usize = file.images.iter().map(|i| i.count).sum();
    println!("{} images, {total} heads; predictions written to {}", file.images.len(), a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let preds: PredictionsFile = read_json(&a.predictions)?;
    let cfg = EvalConfig {
        iou_threshold: a.iou,
        default_radius: a.radius,
    };
    let report = evaluate(&preds.images, &ds.annotations, &cfg)?;
    let with_ext = |ext: &str| {
        let mut p = a.out.clone().into_os_string();
        p.push(ext);
        PathBuf::from(p)
    };
    write_bytes(&with_ext(".json"), report.to_json().as_bytes())?;
    write_bytes(&with_ext(".csv"), report.to_csv().as_bytes())?;
    let l = &report.localization;
    print!(
        "Pre {:.4}  Rec {:.4}  F1-m {:.4}  MAE {:.3}  MSE {:.3}",
        l.precision, l.recall, l.f1, report.counting.mae, report.counting.mse
    );
    if let Some(d) = &report.detection {
        print!("  AP@{} {:.4}", d.iou_threshold, d.ap);
    }
    println!();
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let ds = Dataset::open(&a.data)?;
    let preds: PredictionsFile = read_json(&a.predictions)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let empty = ImagePredictions {
        id: String::new(),
        points: vec![],
        boxes: vec![],
        count: 0,
    };
    for ann in &ds.annotations {
        let image = ds.read_image(&ann.image_id)?;
        let pred = preds.images.iter().find(|p| p.id == ann.image_id).unwrap_or(&empty);
        let ppm = render_overlay(&image, ann, pred, a.radius)?;
        write_bytes(&a.out.join(format!("{}.ppm", ann.image_id)), &ppm)?;
    }
    println!("rendered {} images to {}", ds.annotations.len(), a.out.display());
    Ok(())
}

/// Reads `splits.json` of a synthetic dataset root.
pub fn read_splits(root: &Path) -> Result<Splits> {
    read_json(&root.join("splits.json"))
}
