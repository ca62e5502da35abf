use rand::Rng;

use super::assign::AnchorAssignment;
use crate::error::{arg_err, shape_err, Result};
use crate::geometry::{Anchor, BBox, BoxCoding, RegressionTarget, ANCHOR_PATCH};
use crate::layers::Conv;
use crate::tensor::{Conv2dSpec, Graph, LossKind, ParamStore, Session, Tensor, Var};

pub const RPN_PREFIX: &str = "rpn.";
/// Four box offsets and one objectness value per anchor type.
pub const RPN_OUTPUTS_PER_TYPE: usize = 5;

/// 3x3 trunk shared by all anchor types, then five 1x1 maps per type.
#[derive(Clone, Debug)]
pub struct RpnHead {
    trunk: Conv,
    head: Conv,
    anchor_types: usize,
}

#[derive(Clone, Debug)]
pub struct RpnOutput {
    /// Full-resolution head maps `[h, w, types * 5]` before the objectness
    /// sigmoid, when produced by a head.
    pub maps: Option<Var>,
    /// `[anchors, 4]` regression outputs in anchor order.
    pub offsets: Var,
    /// `[anchors]` objectness probabilities.
    pub objectness: Var,
}

impl RpnHead {
    pub fn new(
        in_channels: usize,
        channels: usize,
        anchor_types: usize,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let trunk = Conv::new(
            store,
            "rpn.trunk",
            3,
            in_channels,
            channels,
            Conv2dSpec::same(1),
            rng,
        );
        let head = Conv::new(
            store,
            "rpn.head",
            1,
            channels,
            anchor_types * RPN_OUTPUTS_PER_TYPE,
            Conv2dSpec {
                stride: 1,
                padding: 0,
                dilation: 1,
            },
            rng,
        );
        RpnHead {
            trunk,
            head,
            anchor_types,
        }
    }

    pub fn anchor_types(&self) -> usize {
        self.anchor_types
    }

    /// Runs the head and samples it at every anchor-patch centre.
    pub fn forward(&self, s: &mut Session, features: Var) -> Result<RpnOutput> {
        let (fh, fw, c) = s.value(features).dims3()?;
        if c != self.trunk.cin {
            return shape_err(format!(
                "rpn expects {} feature channels, got {c}",
                self.trunk.cin
            ));
        }
        let t = self.trunk.forward_relu(s, features)?;
        let maps = self.head.forward(s, t)?;
        let (gh, gw) = crate::geometry::anchor_grid(fh, fw)?;
        let per_cell = self.anchor_types * RPN_OUTPUTS_PER_TYPE;
        let n = gh * gw * self.anchor_types;
        let mut off_idx = Vec::with_capacity(n * 4);
        let mut obj_idx = Vec::with_capacity(n);
        for gr in 0..gh {
            for gc in 0..gw {
                let (y, x) = (gr * ANCHOR_PATCH + 1, gc * ANCHOR_PATCH + 1);
                let base = (y * fw + x) * per_cell;
                for t in 0..self.anchor_types {
                    let o = base + t * RPN_OUTPUTS_PER_TYPE;
                    off_idx.extend(o..o + 4);
                    obj_idx.push(o + 4);
                }
            }
        }
        let offsets = s.graph.gather(maps, off_idx, &[n, 4])?;
        let logits = s.graph.gather(maps, obj_idx, &[n])?;
        let objectness = s.graph.sigmoid(logits)?;
        Ok(RpnOutput {
            maps: Some(maps),
            offsets,
            objectness,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cls: Var,
    pub reg: Option<Var>,
    pub total: Var,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> (f64, f64) {
        (
            g.value(self.cls).item(),
            self.reg.map_or(0.0, |r| g.value(r).item()),
        )
    }
}

/// Binary cross-entropy over sampled positive and negative anchors plus MSE
/// over the regression outputs of the sampled positives.
pub fn rpn_loss(
    g: &mut Graph,
    out: &RpnOutput,
    assignment: &AnchorAssignment,
    sample_cap: usize,
    rng: &mut impl Rng,
) -> Result<LossTerms> {
    let n = g.value(out.objectness).len();
    if assignment.labels.len() != n {
        return shape_err(format!(
            "{} anchor labels for {n} rpn outputs",
            assignment.labels.len()
        ));
    }
    let (pos, neg) = assignment.sample(sample_cap, rng);
    if pos.is_empty() && neg.is_empty() {
        return arg_err("rpn loss needs at least one non-neutral anchor");
    }
    let mut idx = pos.clone();
    idx.extend(&neg);
    let labels: Vec<f64> = pos
        .iter()
        .map(|_| 1.0)
        .chain(neg.iter().map(|_| 0.0))
        .collect();
    let picked = g.gather(out.objectness, idx.clone(), &[idx.len()])?;
    let cls = g.loss(
        picked,
        Tensor::new(vec![idx.len()], labels)?,
        LossKind::BinaryCrossEntropy,
    )?;
    if pos.is_empty() {
        return Ok(LossTerms {
            cls,
            reg: None,
            total: cls,
        });
    }
    let reg_idx: Vec<usize> = pos.iter().flat_map(|&a| a * 4..a * 4 + 4).collect();
    let target: Vec<f64> = pos
        .iter()
        .flat_map(|&a| {
            assignment.targets[a]
                .expect("positives carry targets")
                .to_array()
        })
        .collect();
    let reg_pred = g.gather(out.offsets, reg_idx, &[pos.len(), 4])?;
    let reg = g.loss(
        reg_pred,
        Tensor::new(vec![pos.len(), 4], target)?,
        LossKind::Mse,
    )?;
    let total = g.add(cls, reg)?;
    Ok(LossTerms {
        cls,
        reg: Some(reg),
        total,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    pub anchor: usize,
}

/// Decodes every anchor, clips it to the image, drops degenerate boxes and
/// keeps the `top_k` highest objectness (lowest anchor index on ties).
pub fn generate_proposals(
    offsets: &Tensor,
    objectness: &Tensor,
    anchors: &[Anchor],
    (image_h, image_w): (f64, f64),
    top_k: usize,
    coding: BoxCoding,
) -> Result<Vec<Proposal>> {
    if objectness.len() != anchors.len() || offsets.len() != anchors.len() * 4 {
        return shape_err(format!(
            "{} anchors vs {} objectness / {} offsets",
            anchors.len(),
            objectness.len(),
            offsets.len()
        ));
    }
    let mut props: Vec<Proposal> = anchors
        .iter()
        .enumerate()
        .filter_map(|(i, a)| {
            let t = RegressionTarget::from_slice(&offsets.data()[i * 4..i * 4 + 4]);
            coding
                .decode(&a.bbox, &t, image_h, image_w)
                .map(|bbox| Proposal {
                    bbox,
                    objectness: objectness.data()[i],
                    anchor: i,
                })
        })
        .collect();
    props.sort_by(|a, b| {
        b.objectness
            .total_cmp(&a.objectness)
            .then(a.anchor.cmp(&b.anchor))
    });
    props.truncate(top_k);
    Ok(props)
}
