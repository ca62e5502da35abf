//! Pixel-level segmentation metrics with lesion as the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::mask::Mask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ac: f64,
    pub dc: f64,
    pub ji: f64,
    pub se: f64,
    pub sp: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Metrics whose denominator was zero and were reported as 1.0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl MetricsReport {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        let mut undefined = Vec::new();
        let mut ratio = |name: &str, num: u64, den: u64| {
            if den == 0 {
                undefined.push(name.to_string());
                1.0
            } else {
                num as f64 / den as f64
            }
        };
        let total = tp + fp + tn + fn_;
        let ac = ratio("AC", tp + tn, total);
        let dc = ratio("DC", 2 * tp, 2 * tp + fp + fn_);
        let ji = ratio("JI", tp, tp + fp + fn_);
        let se = ratio("SE", tp, tp + fn_);
        let sp = ratio("SP", tn, tn + fp);
        MetricsReport {
            ac,
            dc,
            ji,
            se,
            sp,
            tp,
            fp,
            tn,
            fn_,
            undefined,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn values(&self) -> [f64; 5] {
        [self.ac, self.dc, self.ji, self.se, self.sp]
    }
}

pub fn compute_metrics(pred: &Mask, gt: &Mask) -> Result<MetricsReport> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return shape_err(format!(
            "prediction is {}x{}, ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        ));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, tn, fn_))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub ac: f64,
    pub dc: f64,
    pub ji: f64,
    pub se: f64,
    pub sp: f64,
}

impl MetricValues {
    fn from_array(v: [f64; 5]) -> Self {
        MetricValues {
            ac: v[0],
            dc: v[1],
            ji: v[2],
            se: v[3],
            sp: v[4],
        }
    }
}

/// Mean and population standard deviation of each metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub count: usize,
    pub mean: MetricValues,
    pub std: MetricValues,
}

pub fn aggregate(reports: &[MetricsReport]) -> AggregateReport {
    let n = reports.len().max(1) as f64;
    let mut mean = [0.0; 5];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 5];
    for r in reports {
        for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
            *s += (v - m) * (v - m);
        }
    }
    AggregateReport {
        count: reports.len(),
        mean: MetricValues::from_array(mean),
        std: MetricValues::from_array(var.map(|v| (v / n).sqrt())),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

/// Per-sample metrics plus their aggregate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleReport>,
    pub aggregate: AggregateReport,
}

impl EvalReport {
    pub fn new(samples: Vec<SampleReport>) -> Self {
        let reports: Vec<MetricsReport> = samples.iter().map(|s| s.metrics.clone()).collect();
        EvalReport {
            aggregate: aggregate(&reports),
            samples,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, v: &[u8]) -> Mask {
        Mask::new(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_two_by_two() {
        let gt = mask(2, 2, &[1, 0, 0, 0]);
        let pred = mask(2, 2, &[1, 1, 0, 0]);
        let r = compute_metrics(&pred, &gt).unwrap();
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (1, 1, 2, 0));
        assert_eq!(r.ac, 0.75);
        assert_eq!(r.se, 1.0);
        assert_eq!(r.sp, 2.0 / 3.0);
        assert_eq!(r.ji, 0.5);
        assert_eq!(r.dc, 2.0 / 3.0);
        assert!(r.undefined.is_empty());
    }

    #[test]
    fn perfect_prediction() {
        let gt = mask(2, 3, &[1, 0, 1, 0, 0, 1]);
        let r = compute_metrics(&gt, &gt).unwrap();
        assert_eq!(r.values(), [1.0; 5]);
    }

    #[test]
    fn empty_lesion_is_flagged() {
        let gt = mask(1, 3, &[0, 0, 0]);
        let r = compute_metrics(&gt, &gt).unwrap();
        assert_eq!(r.se, 1.0);
        assert_eq!(r.undefined, vec!["DC", "JI", "SE"]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(compute_metrics(&Mask::zeros(2, 2), &Mask::zeros(2, 3)).is_err());
    }

    #[test]
    fn aggregate_mean_and_std() {
        let a = MetricsReport::from_counts(1, 1, 2, 0);
        let b = MetricsReport::from_counts(2, 0, 2, 0);
        let agg = aggregate(&[a.clone(), b]);
        assert_eq!(agg.count, 2);
        assert!((agg.mean.ac - 0.875).abs() < 1e-15);
        assert!((agg.std.ac - 0.125).abs() < 1e-15);
    }
}
