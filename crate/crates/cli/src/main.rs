use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use lesion_core::data::{
    evaluate_mask_dirs, load_dataset, render_boxes, render_contours, resize_pair, save_dataset,
    save_mask_png, synth_generate, LabeledSample,
};
use lesion_core::detection::{Detection, DetectorConfig};
use lesion_core::geometry::{iou, BBox};
use lesion_core::pipeline::{detect_any_size, segment_full};
use lesion_core::training::{load_models, save_models, train, TrainConfig};
use serde::Serialize;
use serde_json::{Map, Value};

const DEFAULT_SIZE: usize = 64;
const LOG_FILE: &str = "train_log.jsonl";
const CONFIG_FILE: &str = "config.json";
const SPLIT_FILE: &str = "split.json";
const DETECTIONS_FILE: &str = "detections.json";

/// Skin lesion detection and segmentation.
#[derive(Parser)]
#[command(name = "lesionnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic image/mask dataset and its manifest.
    Synth {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SIZE)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detector and SkinNet; write checkpoints and the train log.
    Train(RunArgs),
    /// Write per-image detections and box overlays.
    Detect(RunArgs),
    /// Write predicted masks and contour overlays.
    Segment(RunArgs),
    /// Score predicted masks against ground-truth masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with training fields plus `dataset`, `checkpoint` and `out`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Epochs for both the detector and SkinNet.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Detector input size; images are resized to it for training.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Debug, Serialize)]
struct RunConfig {
    dataset: PathBuf,
    checkpoint: PathBuf,
    out: PathBuf,
    #[serde(flatten)]
    train: TrainConfig,
}

const PATH_KEYS: [&str; 3] = ["dataset", "checkpoint", "out"];

impl RunConfig {
    fn resolve(args: &RunArgs) -> Result<Self> {
        let mut paths: [Option<PathBuf>; 3] = [None, None, None];
        let mut train = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let mut map: Map<String, Value> = serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?;
                let root = path.parent().unwrap_or(Path::new("."));
                for (slot, key) in paths.iter_mut().zip(PATH_KEYS) {
                    if let Some(v) = map.remove(key) {
                        let s = v
                            .as_str()
                            .with_context(|| format!("`{key}` must be a string"))?;
                        *slot = Some(root.join(s));
                    }
                }
                let cfg: TrainConfig = serde_json::from_value(Value::Object(map))
                    .with_context(|| format!("parsing {}", path.display()))?;
                if let Some(size) = args.size {
                    ensure!(
                        size == cfg.detector.input_size,
                        "--size {size} conflicts with detector.input_size {} in the config",
                        cfg.detector.input_size
                    );
                }
                cfg
            }
            None => TrainConfig::desk(args.size.unwrap_or(DEFAULT_SIZE)),
        };
        for (slot, flag) in paths
            .iter_mut()
            .zip([&args.dataset, &args.checkpoint, &args.out])
        {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
        if let Some(e) = args.epochs {
            train.detector_epochs = e;
            train.skinnet_epochs = e;
        }
        if let Some(s) = args.seed {
            train.seed = s;
        }
        if let Some(lr) = args.lr {
            train.lr = lr;
        }
        train.validate()?;
        let [dataset, checkpoint, out] = paths;
        let dataset = dataset
            .context("no dataset manifest: pass --dataset or set `dataset` in the config")?;
        let out = out.context("no output directory: pass --out or set `out` in the config")?;
        let checkpoint = checkpoint.unwrap_or_else(|| out.clone());
        Ok(RunConfig {
            dataset,
            checkpoint,
            out,
            train,
        })
    }

    /// Checks inputs exist and outputs stay out of the dataset directory.
    fn validate(&self, needs_checkpoint: bool) -> Result<()> {
        ensure!(
            self.dataset.is_file(),
            "dataset manifest {} not found",
            self.dataset.display()
        );
        if needs_checkpoint {
            ensure!(
                self.checkpoint.is_dir(),
                "checkpoint directory {} not found",
                self.checkpoint.display()
            );
        }
        let data_dir = canonical_parent(&self.dataset)?;
        for dir in [&self.out, &self.checkpoint] {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            ensure!(
                dir.canonicalize()? != data_dir,
                "output {} is the dataset directory; choose another",
                dir.display()
            );
        }
        Ok(())
    }
}

fn canonical_parent(file: &Path) -> Result<PathBuf> {
    let parent = file
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    Ok(parent.canonicalize()?)
}

fn load_resized(manifest: &Path, size: usize) -> Result<Vec<LabeledSample>> {
    let samples = load_dataset(manifest)?;
    ensure!(
        !samples.is_empty(),
        "dataset {} is empty",
        manifest.display()
    );
    samples
        .iter()
        .map(|s| {
            if (s.height(), s.width()) == (size, size) {
                Ok(s.clone())
            } else {
                Ok(resize_pair(s, size)?)
            }
        })
        .collect()
}

fn synth(n: usize, seed: u64, size: usize, out: &Path) -> Result<()> {
    let samples = synth_generate(n, seed, size)?;
    let manifest = save_dataset(out, &samples)?;
    log::info!("wrote {n} samples and {}", manifest.display());
    Ok(())
}

fn run_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate(false)?;
    let data = load_resized(&cfg.dataset, cfg.train.detector.input_size)?;
    log::info!("training on {} samples", data.len());
    let outcome = train(&data, &cfg.train)?;
    save_models(&cfg.checkpoint, &outcome.detector, &outcome.skinnet)?;
    fs::write(cfg.out.join(LOG_FILE), outcome.log.to_jsonl()?)?;
    fs::write(
        cfg.out.join(CONFIG_FILE),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    fs::write(
        cfg.out.join(SPLIT_FILE),
        serde_json::to_string_pretty(&outcome.split)? + "\n",
    )?;
    log::info!("checkpoints in {}", cfg.checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct ImageDetections {
    id: String,
    gt_box: Option<BBox>,
    /// IoU of the top detection with the ground-truth box.
    top_iou: Option<f64>,
    detections: Vec<Detection>,
}

fn run_detect(cfg: &RunConfig) -> Result<()> {
    cfg.validate(true)?;
    let (detector, _) = load_models(&cfg.checkpoint)?;
    let data = load_dataset(&cfg.dataset)?;
    let overlays = cfg.out.join("overlays");
    fs::create_dir_all(&overlays)?;
    let mut all = Vec::with_capacity(data.len());
    for s in &data {
        let detections = detect_any_size(&s.image, &detector)?;
        let top = detections.first().map(|d| d.bbox);
        let top_iou = match (&s.gt_box, &top) {
            (Some(g), Some(t)) => Some(iou(g, t)?),
            _ => None,
        };
        render_boxes(&s.image, s.gt_box.as_ref(), top.as_ref())?
            .save(overlays.join(format!("{}.png", s.id)))?;
        all.push(ImageDetections {
            id: s.id.clone(),
            gt_box: s.gt_box,
            top_iou,
            detections,
        });
    }
    fs::write(
        cfg.out.join(DETECTIONS_FILE),
        serde_json::to_string_pretty(&all)? + "\n",
    )?;
    log::info!("detected {} images", all.len());
    Ok(())
}

fn run_segment(cfg: &RunConfig) -> Result<()> {
    cfg.validate(true)?;
    let (detector, skinnet) = load_models(&cfg.checkpoint)?;
    let data = load_dataset(&cfg.dataset)?;
    let masks = cfg.out.join("masks");
    let overlays = cfg.out.join("overlays");
    fs::create_dir_all(&masks)?;
    fs::create_dir_all(&overlays)?;
    for s in &data {
        let seg = segment_full(&s.image, &detector, &skinnet)?;
        if seg.detection.is_none() {
            log::warn!("{}: no detection, writing an empty mask", s.id);
        }
        save_mask_png(&seg.mask, &masks.join(format!("{}.png", s.id)))?;
        render_contours(&s.image, Some(&s.mask), Some(&seg.mask))?
            .save(overlays.join(format!("{}.png", s.id)))?;
    }
    log::info!("segmented {} images", data.len());
    Ok(())
}

fn run_eval(pred: &Path, gt: &Path, out: &Path) -> Result<()> {
    for dir in [pred, gt] {
        ensure!(dir.is_dir(), "mask directory {} not found", dir.display());
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let report = evaluate_mask_dirs(pred, gt)?;
    fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    let m = &report.aggregate.mean;
    println!(
        "{} samples: AC {:.4} DC {:.4} JI {:.4} SE {:.4} SP {:.4}",
        report.aggregate.count, m.ac, m.dc, m.ji, m.se, m.sp
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, seed, size, out } => {
            if size < DetectorConfig::default().backbone.stride() {
                bail!("--size {size} is too small");
            }
            synth(n, seed, size, &out)
        }
        Command::Train(args) => run_train(&RunConfig::resolve(&args)?),
        Command::Detect(args) => run_detect(&RunConfig::resolve(&args)?),
        Command::Segment(args) => run_segment(&RunConfig::resolve(&args)?),
        Command::Eval { pred, gt, out } => run_eval(&pred, &gt, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
