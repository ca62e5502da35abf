use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::{arg_err, Result};
use crate::geometry::{iou_unchecked, Anchor, BBox, BoxCoding, RegressionTarget};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AnchorLabel {
    Positive { gt: usize },
    Negative,
    Neutral,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Regression target for each positive anchor.
    pub targets: Vec<Option<RegressionTarget>>,
    /// Anchors made positive by the best-IoU rule rather than the threshold.
    pub promoted: Vec<usize>,
}

impl AnchorAssignment {
    pub fn positives(&self) -> Vec<usize> {
        self.indices(|l| matches!(l, AnchorLabel::Positive { .. }))
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.indices(|l| *l == AnchorLabel::Negative)
    }

    pub fn neutrals(&self) -> Vec<usize> {
        self.indices(|l| *l == AnchorLabel::Neutral)
    }

    fn indices(&self, pred: impl Fn(&AnchorLabel) -> bool) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| pred(l))
            .map(|(i, _)| i)
            .collect()
    }

    /// Up to `cap` positives and up to `cap` negatives, each subset drawn
    /// uniformly and returned in index order.
    pub fn sample(&self, cap: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
        let mut pick = |mut v: Vec<usize>| {
            if v.len() > cap {
                let mut chosen: Vec<usize> = sample(rng, v.len(), cap)
                    .into_iter()
                    .map(|i| v[i])
                    .collect();
                chosen.sort_unstable();
                v = chosen;
            }
            v
        };
        let pos = pick(self.positives());
        let neg = pick(self.negatives());
        (pos, neg)
    }
}

/// Labels anchors by IoU with offset-coded regression targets.
pub fn assign_anchor_labels(
    anchors: &[Anchor],
    gt_boxes: &[BBox],
    pos_thr: f64,
    neg_thr: f64,
) -> Result<AnchorAssignment> {
    assign_with_coding(
        anchors,
        gt_boxes,
        pos_thr,
        neg_thr,
        BoxCoding::Offsets,
        (f64::MAX, f64::MAX),
    )
}

/// Positive at IoU >= `pos_thr`, negative when IoU < `neg_thr` against every
/// ground truth, neutral otherwise. A ground truth left without a positive
/// promotes its highest-IoU non-positive anchor (lowest index on ties).
pub fn assign_with_coding(
    anchors: &[Anchor],
    gt_boxes: &[BBox],
    pos_thr: f64,
    neg_thr: f64,
    coding: BoxCoding,
    (image_h, image_w): (f64, f64),
) -> Result<AnchorAssignment> {
    if gt_boxes.is_empty() {
        return arg_err("anchor assignment needs at least one ground-truth box");
    }
    if anchors.is_empty() {
        return arg_err("anchor assignment needs at least one anchor");
    }
    let table: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gt_boxes.iter().map(|g| iou_unchecked(&a.bbox, g)).collect())
        .collect();
    let mut labels: Vec<AnchorLabel> = table
        .iter()
        .map(|row| {
            let (best_gt, best) = argmax(row);
            if best >= pos_thr {
                AnchorLabel::Positive { gt: best_gt }
            } else if best < neg_thr {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Neutral
            }
        })
        .collect();
    let mut promoted = Vec::new();
    for g in 0..gt_boxes.len() {
        let has_positive = labels.contains(&AnchorLabel::Positive { gt: g });
        if has_positive {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in table.iter().enumerate() {
            if matches!(labels[i], AnchorLabel::Positive { .. }) {
                continue;
            }
            if best.is_none_or(|(_, v)| row[g] > v) {
                best = Some((i, row[g]));
            }
        }
        if let Some((i, _)) = best {
            labels[i] = AnchorLabel::Positive { gt: g };
            promoted.push(i);
        }
    }
    let targets = labels
        .iter()
        .zip(anchors)
        .map(|(l, a)| match l {
            AnchorLabel::Positive { gt } => {
                Some(coding.encode(&a.bbox, &gt_boxes[*gt], image_h, image_w))
            }
            _ => None,
        })
        .collect();
    Ok(AnchorAssignment {
        labels,
        targets,
        promoted,
    })
}

fn argmax(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_anchors, AspectRatio};

    fn anchor(b: BBox) -> Anchor {
        Anchor {
            bbox: b,
            scale_index: 0,
            ratio_index: 0,
            grid_row: 0,
            grid_col: 0,
        }
    }

    #[test]
    fn identical_anchor_is_positive_with_zero_target() {
        let gt = BBox::new(10.0, 10.0, 30.0, 30.0).unwrap();
        let far = BBox::new(100.0, 100.0, 120.0, 120.0).unwrap();
        let a = assign_anchor_labels(&[anchor(gt), anchor(far)], &[gt], 0.7, 0.4).unwrap();
        assert_eq!(a.labels[0], AnchorLabel::Positive { gt: 0 });
        assert_eq!(a.targets[0], Some(RegressionTarget::default()));
        assert_eq!(a.labels[1], AnchorLabel::Negative);
        assert!(a.promoted.is_empty());
    }

    #[test]
    fn promotes_best_anchor_when_none_reach_threshold() {
        let gt = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let anchors = [
            anchor(BBox::new(5.0, 0.0, 15.0, 10.0).unwrap()), // 1/3
            anchor(BBox::new(2.0, 0.0, 12.0, 10.0).unwrap()), // 8/12
            anchor(BBox::new(0.0, 5.0, 10.0, 15.0).unwrap()), // 1/3
        ];
        let a = assign_anchor_labels(&anchors, &[gt], 0.7, 0.4).unwrap();
        assert_eq!(a.promoted, vec![1]);
        assert_eq!(a.positives(), vec![1]);
        assert_eq!(a.negatives(), vec![0, 2]);
    }

    #[test]
    fn no_ground_truth_is_an_error() {
        let anchors = generate_anchors(3, 3, 8, &[16.0], &[AspectRatio::new(1.0, 1.0)]).unwrap();
        assert!(assign_anchor_labels(&anchors, &[], 0.7, 0.4).is_err());
    }
}
