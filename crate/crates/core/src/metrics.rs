//! Scene completion, semantic completion and 2D segmentation metrics.
//!
//! Counts are accumulated over every scene before dividing, so corpus
//! numbers are micro-averages. A class absent from both prediction and
//! ground truth has no IoU (`None`) and is left out of the mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    /// `None` when the class appears in neither prediction nor ground truth.
    pub fn iou(&self) -> Option<f64> {
        let union = self.tp + self.fp + self.fn_;
        (union > 0).then(|| self.tp as f64 / union as f64)
    }

    fn add(&mut self, other: &ClassCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn mean_iou(ious: &[Option<f64>]) -> f64 {
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// Confusion tallies for label fields over a masked region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    /// Binary occupancy (label > 0).
    pub occupancy: ClassCounts,
    /// Per label, including 0.
    pub classes: Vec<ClassCounts>,
}

impl Tally {
    pub fn new(num_labels: usize) -> Self {
        Tally {
            occupancy: ClassCounts::default(),
            classes: vec![ClassCounts::default(); num_labels],
        }
    }

    pub fn add_scene(&mut self, pred: &[u8], gt: &[u8], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != mask.len() {
            return Err(Error::ShapeMismatch(format!(
                "metrics: {} predictions, {} labels, {} mask entries",
                pred.len(),
                gt.len(),
                mask.len()
            )));
        }
        let k = self.classes.len();
        for ((&p, &g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::LabelOutOfRange {
                    label: p.max(g),
                    num_classes: k,
                });
            }
            if p == g {
                self.classes[p].tp += 1;
            } else {
                self.classes[p].fp += 1;
                self.classes[g].fn_ += 1;
            }
            match (p > 0, g > 0) {
                (true, true) => self.occupancy.tp += 1,
                (true, false) => self.occupancy.fp += 1,
                (false, true) => self.occupancy.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Tally) {
        self.occupancy.add(&other.occupancy);
        for (a, b) in self.classes.iter_mut().zip(&other.classes) {
            a.add(b);
        }
    }

    pub fn ssc(&self) -> SscMetrics {
        let o = &self.occupancy;
        let per_class: Vec<Option<f64>> = self.classes.iter().map(ClassCounts::iou).collect();
        SscMetrics {
            sc_precision: ratio(o.tp, o.tp + o.fp),
            sc_recall: ratio(o.tp, o.tp + o.fn_),
            sc_iou: ratio(o.tp, o.tp + o.fp + o.fn_),
            ssc_miou: mean_iou(&per_class[1..]),
            ssc_per_class_iou: per_class,
        }
    }

    pub fn ss(&self) -> SsMetrics {
        let per_class: Vec<Option<f64>> = self.classes[1..].iter().map(ClassCounts::iou).collect();
        SsMetrics {
            ss_miou: mean_iou(&per_class),
            ss_per_class_iou: per_class,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SscMetrics {
    pub sc_precision: f64,
    pub sc_recall: f64,
    pub sc_iou: f64,
    /// Indexed by label; entry 0 (empty) is reported but never averaged.
    pub ssc_per_class_iou: Vec<Option<f64>>,
    pub ssc_miou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SsMetrics {
    /// Object classes `1..=K`.
    pub ss_per_class_iou: Vec<Option<f64>>,
    pub ss_miou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub ssc: SscMetrics,
    #[serde(flatten)]
    pub ss: SsMetrics,
}

fn require_mask(mask: &[bool], what: &str) -> Result<()> {
    if mask.iter().any(|&m| m) {
        Ok(())
    } else {
        Err(Error::EmptyMask(format!("{what} evaluation region is empty")))
    }
}

/// Scene completion and semantic completion scores of one volume.
pub fn evaluate_ssc(pred: &[u8], gt: &[u8], mask: &[bool], num_labels: usize) -> Result<SscMetrics> {
    require_mask(mask, "3D")?;
    let mut t = Tally::new(num_labels);
    t.add_scene(pred, gt, mask)?;
    Ok(t.ssc())
}

/// Per-class pixel IoU of one label map over its valid pixels.
pub fn evaluate_ss(pred: &[u8], gt: &[u8], valid: &[bool], num_labels: usize) -> Result<SsMetrics> {
    require_mask(valid, "2D")?;
    let mut t = Tally::new(num_labels);
    t.add_scene(pred, gt, valid)?;
    Ok(t.ss())
}
