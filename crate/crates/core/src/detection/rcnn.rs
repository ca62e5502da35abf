use rand::Rng;
use serde::{Deserialize, Serialize};

use super::roi::{roi_pool, ROI_POOLED};
use super::rpn::LossTerms;
use crate::error::{arg_err, shape_err, Result};
use crate::geometry::{BBox, RegressionTarget};
use crate::layers::{Conv, Dense};
use crate::tensor::{Conv2dSpec, Graph, LossKind, ParamStore, Session, Tensor, Var};

pub const RCNN_PREFIX: &str = "rcnn.";
/// Column of the lesion class in the class-probability output.
pub const LESION: usize = 0;
pub const BACKGROUND: usize = 1;

/// Per-proposal head, shared across all proposals of an image.
#[derive(Clone, Debug)]
pub struct RcnnHead {
    conv: Conv,
    fc: Dense,
    cls: Dense,
    reg: Dense,
    flat: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct RcnnOutput {
    /// `[proposals, 2]` softmax over {lesion, background}.
    pub probs: Var,
    /// `[proposals, 4]` refinement offsets relative to each proposal.
    pub refine: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Probabilities of {lesion, background}.
    pub probs: [f64; 2],
}

impl Detection {
    pub fn lesion_prob(&self) -> f64 {
        self.probs[LESION]
    }
}

impl RcnnHead {
    pub fn new(
        in_channels: usize,
        channels: usize,
        hidden: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let conv = Conv::new(
            store,
            "rcnn.conv",
            3,
            in_channels,
            channels,
            Conv2dSpec::same(1),
            rng,
        );
        let flat = ROI_POOLED * ROI_POOLED * channels;
        RcnnHead {
            conv,
            fc: Dense::new(store, "rcnn.fc", flat, hidden, rng),
            cls: Dense::new(store, "rcnn.cls", hidden, 2, rng),
            reg: Dense::new(store, "rcnn.reg", hidden, 4, rng),
            flat,
        }
    }

    /// Applies the head to each pooled `[7, 7, C]` feature independently.
    pub fn forward(&self, s: &mut Session, pooled: &[Var]) -> Result<RcnnOutput> {
        if pooled.is_empty() {
            return arg_err("rcnn head needs at least one proposal");
        }
        let mut flats = Vec::with_capacity(pooled.len());
        for &p in pooled {
            let (h, w, c) = s.value(p).dims3()?;
            if (h, w) != (ROI_POOLED, ROI_POOLED) || c != self.conv.cin {
                return shape_err(format!(
                    "rcnn expects {ROI_POOLED}x{ROI_POOLED}x{} input, got {h}x{w}x{c}",
                    self.conv.cin
                ));
            }
            let x = self.conv.forward_relu(s, p)?;
            flats.push(s.graph.reshape(x, &[1, self.flat])?);
        }
        let stacked = if flats.len() == 1 {
            flats[0]
        } else {
            let wide = s.graph.concat(&flats)?;
            s.graph.reshape(wide, &[pooled.len(), self.flat])?
        };
        let hidden = self.fc.forward(s, stacked)?;
        let hidden = s.graph.relu(hidden)?;
        let logits = self.cls.forward(s, hidden)?;
        let probs = s.graph.softmax(logits)?;
        let refine = self.reg.forward(s, hidden)?;
        Ok(RcnnOutput { probs, refine })
    }

    /// ROI-pools every box from `features` and runs the head.
    pub fn forward_boxes(
        &self,
        s: &mut Session,
        features: Var,
        boxes: &[BBox],
        stride: usize,
    ) -> Result<RcnnOutput> {
        let mut pooled = Vec::with_capacity(boxes.len());
        for b in boxes {
            pooled.push(roi_pool(&mut s.graph, features, b, stride)?);
        }
        self.forward(s, &pooled)
    }
}

/// Categorical cross-entropy over all proposals plus MSE on the refinement
/// outputs of lesion proposals. `targets[i]` is `Some` for lesion proposals.
pub fn rcnn_loss(
    g: &mut Graph,
    out: &RcnnOutput,
    targets: &[Option<RegressionTarget>],
) -> Result<LossTerms> {
    if targets.is_empty() {
        return arg_err("rcnn loss needs at least one proposal");
    }
    let n = g.value(out.probs).shape()[0];
    if n != targets.len() {
        return shape_err(format!("{} proposal labels for {n} outputs", targets.len()));
    }
    let onehot: Vec<f64> = targets
        .iter()
        .flat_map(|t| if t.is_some() { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    let cls = g.loss(
        out.probs,
        Tensor::new(vec![n, 2], onehot)?,
        LossKind::CategoricalCrossEntropy,
    )?;
    let lesion: Vec<usize> = (0..n).filter(|&i| targets[i].is_some()).collect();
    if lesion.is_empty() {
        return Ok(LossTerms {
            cls,
            reg: None,
            total: cls,
        });
    }
    let idx: Vec<usize> = lesion.iter().flat_map(|&i| i * 4..i * 4 + 4).collect();
    let goal: Vec<f64> = lesion
        .iter()
        .flat_map(|&i| targets[i].unwrap().to_array())
        .collect();
    let pred = g.gather(out.refine, idx, &[lesion.len(), 4])?;
    let reg = g.loss(
        pred,
        Tensor::new(vec![lesion.len(), 4], goal)?,
        LossKind::Mse,
    )?;
    let total = g.add(cls, reg)?;
    Ok(LossTerms {
        cls,
        reg: Some(reg),
        total,
    })
}
