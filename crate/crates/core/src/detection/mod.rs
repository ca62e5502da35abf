//! Region-proposal detector: backbone, RPN, ROI pooling and RCNN head.

mod assign;
mod backbone;
mod config;
mod rcnn;
mod roi;
mod rpn;

pub use assign::{assign_anchor_labels, assign_with_coding, AnchorAssignment, AnchorLabel};
pub use backbone::{Backbone, BASE_PREFIX};
pub use config::{BackboneConfig, DetectorConfig};
pub use rcnn::{rcnn_loss, Detection, RcnnHead, RcnnOutput, BACKGROUND, LESION, RCNN_PREFIX};
pub use roi::{roi_crop, roi_pool, ROI_CROP, ROI_POOLED};
pub use rpn::{
    generate_proposals, rpn_loss, LossTerms, Proposal, RpnHead, RpnOutput, RPN_OUTPUTS_PER_TYPE,
    RPN_PREFIX,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};
use crate::geometry::{generate_anchors, iou, nms, Anchor, BBox, RegressionTarget};
use crate::tensor::{ParamId, ParamStore, Session, Tensor};

/// The full detector: parameters plus the layer layout that indexes them.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub rpn: RpnHead,
    pub rcnn: RcnnHead,
    anchors: Vec<Anchor>,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, 3, &mut params, &mut rng);
        let c = config.backbone.out_channels();
        let rpn = RpnHead::new(
            c,
            config.rpn_channels,
            config.anchor_types(),
            &mut params,
            &mut rng,
        );
        let rcnn = RcnnHead::new(
            c,
            config.rcnn_channels,
            config.rcnn_hidden,
            &mut params,
            &mut rng,
        );
        let fs = config.feature_size();
        let anchors = generate_anchors(
            fs,
            fs,
            config.backbone.stride(),
            &config.anchor_scales,
            &config.anchor_ratios,
        )?;
        Ok(Detector {
            config,
            params,
            backbone,
            rpn,
            rcnn,
            anchors,
        })
    }

    /// Rebuilds the layout for `config` and loads `params` into it.
    pub fn from_params(config: DetectorConfig, params: &ParamStore) -> Result<Self> {
        let mut d = Detector::new(config, 0)?;
        d.params.load_from(params)?;
        Ok(d)
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn stride(&self) -> usize {
        self.backbone.stride()
    }

    pub fn base_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix(BASE_PREFIX).collect()
    }

    pub fn rpn_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix(RPN_PREFIX).collect()
    }

    pub fn rcnn_ids(&self) -> Vec<ParamId> {
        self.params.ids_with_prefix(RCNN_PREFIX).collect()
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (h, w, c) = image.dims3()?;
        let n = self.config.input_size;
        if (h, w, c) != (n, n, 3) {
            return arg_err(format!(
                "detector expects {n}x{n}x3 images, got {h}x{w}x{c}"
            ));
        }
        Ok(())
    }

    /// RPN proposals for an image, from a detached forward pass.
    pub fn proposals(&self, image: &Tensor, top_k: usize) -> Result<Vec<Proposal>> {
        self.check_image(image)?;
        let mut s = Session::inference(&self.params);
        let x = s.input(image.clone());
        let f = self.backbone.forward(&mut s, x)?;
        let out = self.rpn.forward(&mut s, f)?;
        let size = self.config.input_size as f64;
        generate_proposals(
            s.value(out.offsets),
            s.value(out.objectness),
            &self.anchors,
            (size, size),
            top_k,
            self.config.box_coding,
        )
    }

    /// Backbone, RPN, top-k proposals, ROI pooling, RCNN head, refinement,
    /// score filtering and NMS. Sorted by lesion probability.
    pub fn detect(&self, image: &Tensor) -> Result<Vec<Detection>> {
        self.check_image(image)?;
        let size = self.config.input_size as f64;
        let mut s = Session::inference(&self.params);
        let x = s.input(image.clone());
        let f = self.backbone.forward(&mut s, x)?;
        let out = self.rpn.forward(&mut s, f)?;
        let proposals = generate_proposals(
            s.value(out.offsets),
            s.value(out.objectness),
            &self.anchors,
            (size, size),
            self.config.top_k,
            self.config.box_coding,
        )?;
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let head = self.rcnn.forward_boxes(&mut s, f, &boxes, self.stride())?;
        let probs = s.value(head.probs).data();
        let refine = s.value(head.refine).data();
        let mut cands = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            let p = [probs[i * 2], probs[i * 2 + 1]];
            if p[LESION] <= self.config.score_threshold {
                continue;
            }
            let t = RegressionTarget::from_slice(&refine[i * 4..i * 4 + 4]);
            if let Some(bbox) = self.config.box_coding.decode(b, &t, size, size) {
                cands.push(Detection { bbox, probs: p });
            }
        }
        let boxes: Vec<BBox> = cands.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = cands.iter().map(Detection::lesion_prob).collect();
        let keep = nms(&boxes, &scores, self.config.nms_threshold)?;
        Ok(keep.into_iter().map(|i| cands[i]).collect())
    }

    /// RCNN training labels: lesion (with refinement target) when a proposal
    /// overlaps the ground truth by at least `rcnn_positive_iou`.
    pub fn rcnn_targets(&self, boxes: &[BBox], gt: &BBox) -> Result<Vec<Option<RegressionTarget>>> {
        let size = self.config.input_size as f64;
        boxes
            .iter()
            .map(|b| {
                Ok((iou(b, gt)? >= self.config.rcnn_positive_iou)
                    .then(|| self.config.box_coding.encode(b, gt, size, size)))
            })
            .collect()
    }
}
