//! Alternating four-step detector training, SkinNet training, logs and
//! checkpoints.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{aggregate, split_indices, LabeledSample, Split};
use crate::detection::{
    assign_with_coding, rcnn_loss, rpn_loss, Detector, DetectorConfig, LossTerms,
};
use crate::error::{arg_err, Error, Result};
use crate::geometry::BBox;
use crate::pipeline::{
    crop_image, crop_mask, crop_window, evaluate_gt_crops, score_detections, CROP_MARGIN,
};
use crate::skinnet::{dice_loss, SkinNet, SkinNetConfig};
use crate::tensor::{
    adam_step, load_checkpoint, save_checkpoint, AdamState, Hyper, ParamId, ParamStore, Session,
    Tensor, DEFAULT_LR,
};

pub const DETECTOR_CHECKPOINT: &str = "detector.ckpt";
pub const SKINNET_CHECKPOINT: &str = "skinnet.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Passes of the four-step schedule over the training split.
    pub detector_epochs: usize,
    pub skinnet_epochs: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Random horizontal and vertical flips of training samples.
    pub flips: bool,
    /// Max shift of each crop edge, as a fraction of the box extent, when
    /// cropping ground-truth boxes for SkinNet training.
    pub crop_jitter: f64,
    pub detector: DetectorConfig,
    pub skinnet: SkinNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lr: DEFAULT_LR,
            batch_size: 4,
            detector_epochs: 10,
            skinnet_epochs: 10,
            split: [0.7, 0.2, 0.1],
            flips: true,
            crop_jitter: 0.05,
            detector: DetectorConfig::default(),
            skinnet: SkinNetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Small configuration for CPU runs on `input_size` images: anchor
    /// scales rescaled to the input, 32-pixel SkinNet crops.
    pub fn desk(input_size: usize) -> Self {
        TrainConfig {
            detector_epochs: 20,
            skinnet_epochs: 10,
            detector: DetectorConfig::for_input(input_size),
            skinnet: SkinNetConfig {
                input_size: 32,
                ..SkinNetConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return arg_err(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return arg_err("batch size must be positive");
        }
        if !(0.0..0.5).contains(&self.crop_jitter) {
            return arg_err(format!("crop jitter {} outside [0, 0.5)", self.crop_jitter));
        }
        self.detector.validate()?;
        self.skinnet.validate()
    }
}

/// The four steps of the alternating schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleStep {
    /// Base network and RPN.
    RpnWithBase,
    /// Base network and RCNN head on proposals from the step-1 RPN.
    RcnnWithBase,
    /// RPN only, base frozen.
    RpnFineTune,
    /// RCNN head only, base frozen.
    RcnnFineTune,
}

impl ScheduleStep {
    pub const ALL: [ScheduleStep; 4] = [
        ScheduleStep::RpnWithBase,
        ScheduleStep::RcnnWithBase,
        ScheduleStep::RpnFineTune,
        ScheduleStep::RcnnFineTune,
    ];

    pub fn number(self) -> u8 {
        match self {
            ScheduleStep::RpnWithBase => 1,
            ScheduleStep::RcnnWithBase => 2,
            ScheduleStep::RpnFineTune => 3,
            ScheduleStep::RcnnFineTune => 4,
        }
    }

    pub fn trains_rpn(self) -> bool {
        matches!(self, ScheduleStep::RpnWithBase | ScheduleStep::RpnFineTune)
    }

    pub fn trains_base(self) -> bool {
        matches!(self, ScheduleStep::RpnWithBase | ScheduleStep::RcnnWithBase)
    }

    pub fn trainable(self, detector: &Detector) -> Vec<ParamId> {
        let mut ids = if self.trains_base() {
            detector.base_ids()
        } else {
            Vec::new()
        };
        ids.extend(if self.trains_rpn() {
            detector.rpn_ids()
        } else {
            detector.rcnn_ids()
        });
        ids
    }
}

impl fmt::Display for ScheduleStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step{}", self.number())
    }
}

/// Adam over a fixed subset of a parameter store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    ids: Vec<ParamId>,
    state: AdamState,
}

impl Optimizer {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let state = AdamState::new(ids.iter().map(|&id| store.get(id).shape()));
        Optimizer { ids, state }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps(&self) -> u64 {
        self.state.step
    }

    /// Applies `grads`, which must list exactly this optimizer's parameters.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.ids.len() || grads.iter().zip(&self.ids).any(|((g, _), id)| g != id)
        {
            return arg_err("gradient list does not match the optimizer's parameters");
        }
        let mut values: Vec<Tensor> = self.ids.iter().map(|&id| store.get(id).clone()).collect();
        let mut refs: Vec<&mut Tensor> = values.iter_mut().collect();
        let grad_refs: Vec<&Tensor> = grads.iter().map(|(_, g)| g).collect();
        adam_step(&mut refs, &grad_refs, &mut self.state, lr)?;
        for (&id, v) in self.ids.iter().zip(values) {
            *store.get_mut(id) = v;
        }
        Ok(())
    }
}

/// Running sum of per-sample gradients.
struct GradSum {
    sums: Vec<(ParamId, Tensor)>,
    count: usize,
}

impl GradSum {
    fn new() -> Self {
        GradSum {
            sums: Vec::new(),
            count: 0,
        }
    }

    fn add(&mut self, grads: Vec<(ParamId, Tensor)>) {
        if self.sums.is_empty() {
            self.sums = grads;
        } else {
            for ((_, acc), (_, g)) in self.sums.iter_mut().zip(grads) {
                acc.data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, b)| *a += b);
            }
        }
        self.count += 1;
    }

    fn mean(mut self) -> Vec<(ParamId, Tensor)> {
        let k = self.count.max(1) as f64;
        for (_, t) in &mut self.sums {
            t.data_mut().iter_mut().for_each(|v| *v /= k);
        }
        self.sums
    }
}

/// One Adam state per schedule step.
#[derive(Clone, Debug)]
pub struct DetectorOptimizers {
    steps: Vec<Optimizer>,
}

impl DetectorOptimizers {
    pub fn new(detector: &Detector) -> Self {
        DetectorOptimizers {
            steps: ScheduleStep::ALL
                .iter()
                .map(|s| Optimizer::new(&detector.params, s.trainable(detector)))
                .collect(),
        }
    }

    pub fn get(&self, step: ScheduleStep) -> &Optimizer {
        &self.steps[step.number() as usize - 1]
    }

    fn get_mut(&mut self, step: ScheduleStep) -> &mut Optimizer {
        &mut self.steps[step.number() as usize - 1]
    }
}

/// Mean losses of one optimizer update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub cls: f64,
    pub reg: f64,
}

/// Runs one schedule step on a batch: per-image forward and backward passes,
/// gradients averaged over the batch, one Adam update on the step's
/// parameters. Samples without a lesion are skipped.
pub fn detector_step(
    detector: &mut Detector,
    opts: &mut DetectorOptimizers,
    step: ScheduleStep,
    batch: &[LabeledSample],
    lr: f64,
    rng: &mut impl Rng,
) -> Result<StepLosses> {
    let trainable = opts.get(step).ids().to_vec();
    let mut sum = GradSum::new();
    let (mut cls, mut reg) = (0.0, 0.0);
    for sample in batch {
        let Some(gt) = sample.gt_box else {
            log::warn!("skipping {}: empty ground-truth mask", sample.id);
            continue;
        };
        let mut s = Session::with_trainable(&detector.params, trainable.iter().copied());
        let x = s.input(sample.image.clone());
        let features = detector.backbone.forward(&mut s, x)?;
        let out = detector.rpn.forward(&mut s, features)?;
        let terms = if step.trains_rpn() {
            let n = detector.config.input_size as f64;
            let assignment = assign_with_coding(
                detector.anchors(),
                &[gt],
                detector.config.positive_iou,
                detector.config.negative_iou,
                detector.config.box_coding,
                (n, n),
            )?;
            rpn_loss(
                &mut s.graph,
                &out,
                &assignment,
                detector.config.rpn_sample_cap,
                rng,
            )?
        } else {
            let boxes = training_rois(detector, &s, &out, &gt)?;
            let targets = detector.rcnn_targets(&boxes, &gt)?;
            let head = detector
                .rcnn
                .forward_boxes(&mut s, features, &boxes, detector.stride())?;
            rcnn_loss(&mut s.graph, &head, &targets)?
        };
        accumulate(&mut s, &terms, &mut sum, &mut cls, &mut reg)?;
    }
    let n = sum.count;
    if n == 0 {
        return Ok(StepLosses { cls: 0.0, reg: 0.0 });
    }
    opts.get_mut(step)
        .step(&mut detector.params, &sum.mean(), lr)?;
    Ok(StepLosses {
        cls: cls / n as f64,
        reg: reg / n as f64,
    })
}

fn accumulate(
    s: &mut Session,
    terms: &LossTerms,
    sum: &mut GradSum,
    cls: &mut f64,
    reg: &mut f64,
) -> Result<()> {
    let (c, r) = terms.values(&s.graph);
    if !(c.is_finite() && r.is_finite()) {
        return Err(Error::Argument(format!(
            "non-finite training loss (cls {c}, reg {r})"
        )));
    }
    *cls += c;
    *reg += r;
    s.backward(terms.total)?;
    sum.add(s.param_grads());
    Ok(())
}

/// Top training proposals from the current RPN (detached) plus the ground
/// truth itself.
fn training_rois(
    detector: &Detector,
    s: &Session,
    out: &crate::detection::RpnOutput,
    gt: &BBox,
) -> Result<Vec<BBox>> {
    let n = detector.config.input_size as f64;
    let props = crate::detection::generate_proposals(
        s.value(out.offsets),
        s.value(out.objectness),
        detector.anchors(),
        (n, n),
        detector.config.train_top_k,
        detector.config.box_coding,
    )?;
    let mut boxes: Vec<BBox> = props.into_iter().map(|p| p.bbox).collect();
    boxes.push(*gt);
    Ok(boxes)
}

/// The full alternating schedule on one batch. `observe` sees the parameters
/// after each step.
pub fn four_step_train_batch(
    detector: &mut Detector,
    opts: &mut DetectorOptimizers,
    batch: &[LabeledSample],
    lr: f64,
    rng: &mut impl Rng,
    mut observe: impl FnMut(ScheduleStep, &StepLosses, &ParamStore),
) -> Result<Vec<StepLosses>> {
    let mut out = Vec::with_capacity(4);
    for step in ScheduleStep::ALL {
        let losses = detector_step(detector, opts, step, batch, lr, rng)?;
        observe(step, &losses, &detector.params);
        out.push(losses);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detector,
    Skinnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        stage: Stage,
        epoch: usize,
        batch: usize,
        /// Schedule step for the detector stage.
        #[serde(skip_serializing_if = "Option::is_none")]
        step: Option<u8>,
        /// Classification (detector) or dice (SkinNet) loss.
        loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        reg: Option<f64>,
    },
    Validation {
        stage: Stage,
        epoch: usize,
        metric: String,
        value: f64,
        best: bool,
    },
}

/// Training records with the wall-clock time each was written at. Only the
/// records are deterministic.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    pub elapsed_ms: Vec<f64>,
    start: Option<Instant>,
}

impl TrainLog {
    pub fn new() -> Self {
        TrainLog::default()
    }

    pub fn push(&mut self, record: LogRecord) {
        let start = *self.start.get_or_insert_with(Instant::now);
        log::debug!("{}", serde_json::to_string(&record).unwrap_or_default());
        self.records.push(record);
        self.elapsed_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }

    /// One JSON object per record, with its timestamp.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (r, t) in self.records.iter().zip(&self.elapsed_ms) {
            let mut v = serde_json::to_value(r)?;
            v["elapsed_ms"] = serde_json::json!(t);
            out.push_str(&serde_json::to_string(&v)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn maybe_flip(sample: &LabeledSample, flips: bool, rng: &mut impl Rng) -> LabeledSample {
    if flips {
        sample.flipped(rng.gen_bool(0.5), rng.gen_bool(0.5))
    } else {
        sample.clone()
    }
}

fn batches(indices: &[usize], size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Trains the detector with the alternating schedule. Validation IoU is
/// logged per epoch; the final parameters are kept.
pub fn train_detector(
    detector: &mut Detector,
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut opts = DetectorOptimizers::new(detector);
    let usable: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].gt_box.is_some())
        .collect();
    let mut best = f64::NEG_INFINITY;
    for epoch in 0..cfg.detector_epochs {
        for (b, idx) in batches(&usable, cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let batch: Vec<LabeledSample> = idx
                .iter()
                .map(|&i| maybe_flip(&train[i], cfg.flips, &mut rng))
                .collect();
            let mut records = Vec::new();
            four_step_train_batch(
                detector,
                &mut opts,
                &batch,
                cfg.lr,
                &mut rng,
                |step, l, _| {
                    records.push(LogRecord::Step {
                        stage: Stage::Detector,
                        epoch,
                        batch: b,
                        step: Some(step.number()),
                        loss: l.cls,
                        reg: Some(l.reg),
                    });
                },
            )?;
            records.into_iter().for_each(|r| log.push(r));
        }
        if val.is_empty() {
            continue;
        }
        let scores = score_detections(detector, val)?;
        let mean = scores.iter().map(|s| s.best_iou).sum::<f64>() / scores.len().max(1) as f64;
        log.push(LogRecord::Validation {
            stage: Stage::Detector,
            epoch,
            metric: "mean_best_iou".into(),
            value: mean,
            best: mean > best,
        });
        best = best.max(mean);
        log::info!("detector epoch {epoch}: validation mean best IoU {mean:.4}");
    }
    Ok(())
}

/// Ground-truth crop for SkinNet training, with optional edge jitter.
pub fn skinnet_example(
    sample: &LabeledSample,
    size: usize,
    jitter: f64,
    rng: &mut impl Rng,
) -> Result<Option<(Tensor, Tensor)>> {
    let Some(gt) = sample.gt_box else {
        return Ok(None);
    };
    let (w, h) = (gt.width(), gt.height());
    let mut j = |extent: f64| {
        if jitter > 0.0 {
            rng.gen_range(-jitter..=jitter) * extent
        } else {
            0.0
        }
    };
    let jittered = BBox {
        x1: gt.x1 + j(w),
        y1: gt.y1 + j(h),
        x2: gt.x2 + j(w),
        y2: gt.y2 + j(h),
    };
    let bbox = if jittered.is_valid() { jittered } else { gt };
    let Some(window) = crop_window(&bbox, CROP_MARGIN, sample.height(), sample.width()) else {
        return Ok(None);
    };
    let crop = crop_image(&sample.image, &window, size)?;
    let mask = crop_mask(&sample.mask, &window, size)?;
    Ok(Some((crop, mask.one_hot())))
}

/// Trains SkinNet with the dice loss on ground-truth crops and keeps the
/// parameters with the best mean validation dice coefficient.
pub fn train_skinnet(
    net: &mut SkinNet,
    train: &[LabeledSample],
    val: &[LabeledSample],
    cfg: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let ids: Vec<ParamId> = net.params.ids().collect();
    let mut opt = Optimizer::new(&net.params, ids.clone());
    let usable: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].gt_box.is_some())
        .collect();
    let size = net.config.input_size;
    let mut best: Option<(f64, ParamStore)> = None;
    for epoch in 0..cfg.skinnet_epochs {
        for (b, idx) in batches(&usable, cfg.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let mut sum = GradSum::new();
            let mut total = 0.0;
            for &i in &idx {
                let sample = maybe_flip(&train[i], cfg.flips, &mut rng);
                let Some((crop, onehot)) =
                    skinnet_example(&sample, size, cfg.crop_jitter, &mut rng)?
                else {
                    continue;
                };
                let mut s = Session::with_trainable(&net.params, ids.iter().copied());
                let x = s.input(crop);
                let probs = net.forward(&mut s, x)?;
                let loss = dice_loss(&mut s.graph, probs, &onehot)?;
                total += s.value(loss).item();
                s.backward(loss)?;
                sum.add(s.param_grads());
            }
            if sum.count == 0 {
                continue;
            }
            let n = sum.count as f64;
            opt.step(&mut net.params, &sum.mean(), cfg.lr)?;
            log.push(LogRecord::Step {
                stage: Stage::Skinnet,
                epoch,
                batch: b,
                step: None,
                loss: total / n,
                reg: None,
            });
        }
        if val.is_empty() {
            continue;
        }
        let dc = aggregate(&evaluate_gt_crops(net, val)?).mean.dc;
        let improved = best.as_ref().is_none_or(|(v, _)| dc > *v);
        log.push(LogRecord::Validation {
            stage: Stage::Skinnet,
            epoch,
            metric: "mean_dc".into(),
            value: dc,
            best: improved,
        });
        log::info!("skinnet epoch {epoch}: validation mean DC {dc:.4}");
        if improved {
            best = Some((dc, net.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        net.params = params;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub detector: Detector,
    pub skinnet: SkinNet,
    pub log: TrainLog,
    pub split: Split,
}

fn subset(samples: &[LabeledSample], idx: &[usize]) -> Vec<LabeledSample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Splits the dataset, trains the detector then SkinNet. Samples must
/// already match the detector's input size.
pub fn train(dataset: &[LabeledSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = cfg.detector.input_size;
    if let Some(bad) = dataset.iter().find(|s| (s.height(), s.width()) != (n, n)) {
        return arg_err(format!(
            "sample {} is {}x{}, detector input is {n}x{n}",
            bad.id,
            bad.height(),
            bad.width()
        ));
    }
    let split = split_indices(dataset.len(), cfg.split, cfg.seed)?;
    if split.train.is_empty() {
        return arg_err("training split is empty");
    }
    let train_set = subset(dataset, &split.train);
    let val_set = subset(dataset, &split.val);
    let mut log = TrainLog::new();
    let mut detector = Detector::new(cfg.detector.clone(), cfg.seed)?;
    train_detector(&mut detector, &train_set, &val_set, cfg, &mut log)?;
    let mut skinnet = SkinNet::new(cfg.skinnet.clone(), cfg.seed.wrapping_add(1))?;
    train_skinnet(&mut skinnet, &train_set, &val_set, cfg, &mut log)?;
    Ok(TrainOutcome {
        detector,
        skinnet,
        log,
        split,
    })
}

fn hyper_with(key: &str, value: serde_json::Value) -> Hyper {
    let mut h = Hyper::new();
    h.insert(key.to_string(), value);
    h
}

/// Writes both models' checkpoints (with their configurations) into `dir`.
pub fn save_models(dir: &Path, detector: &Detector, skinnet: &SkinNet) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_checkpoint(
        &dir.join(DETECTOR_CHECKPOINT),
        &detector.params,
        &hyper_with("detector", serde_json::to_value(&detector.config)?),
    )?;
    save_checkpoint(
        &dir.join(SKINNET_CHECKPOINT),
        &skinnet.params,
        &hyper_with("skinnet", serde_json::to_value(&skinnet.config)?),
    )
}

pub fn load_models(dir: &Path) -> Result<(Detector, SkinNet)> {
    let config = |h: &Hyper, key: &str| {
        h.get(key)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks the {key} configuration")))
    };
    let (params, hyper) = load_checkpoint(&dir.join(DETECTOR_CHECKPOINT))?;
    let detector = Detector::from_params(
        serde_json::from_value(config(&hyper, "detector")?)?,
        &params,
    )?;
    let (params, hyper) = load_checkpoint(&dir.join(SKINNET_CHECKPOINT))?;
    let skinnet =
        SkinNet::from_params(serde_json::from_value(config(&hyper, "skinnet")?)?, &params)?;
    Ok((detector, skinnet))
}
