//! Ablation grid over the A-E configurations and the iteration-count sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{AblationConfig, AblationLabel, PreparedSample};
use crate::trainer::{EvalRecord, TrainConfig, Trainer};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Published ablation scores in percent, shown next to measured rows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub label: AblationLabel,
    pub ss: f64,
    pub ssc: f64,
    pub sc: f64,
}

pub const REFERENCE_ABLATION: [ReferenceRow; 5] = [
    ReferenceRow { label: AblationLabel::A, ss: 46.8, ssc: 40.3, sc: 72.3 },
    ReferenceRow { label: AblationLabel::B, ss: 48.1, ssc: 42.5, sc: 74.3 },
    ReferenceRow { label: AblationLabel::C, ss: 62.2, ssc: 42.8, sc: 75.5 },
    ReferenceRow { label: AblationLabel::D, ss: 47.4, ssc: 44.8, sc: 77.7 },
    ReferenceRow { label: AblationLabel::E, ss: 65.6, ssc: 47.5, sc: 79.1 },
];

pub fn reference_row(label: AblationLabel) -> ReferenceRow {
    REFERENCE_ABLATION[label as usize]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: AblationLabel,
    pub iterative: bool,
    pub dcp: bool,
    pub dda: bool,
    /// Means over seeds, as fractions.
    pub ss_miou: f64,
    pub ssc_miou: f64,
    pub sc_iou: f64,
    pub per_seed: Vec<MetricsReport>,
    pub reference: ReferenceRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: AblationLabel) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Plain-text table with measured and reference columns.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<3} {:<3} {:<3} {:<3} {:>6} {:>6} {:>6}   {:>6} {:>6} {:>6}\n",
            "", "IL", "DCP", "DDA", "SS", "SSC", "SC", "refSS", "refSSC", "refSC"
        );
        let mark = |b: bool| if b { "y" } else { "-" };
        for r in &self.rows {
            out += &format!(
                "{:<3} {:<3} {:<3} {:<3} {:>6.1} {:>6.1} {:>6.1}   {:>6.1} {:>6.1} {:>6.1}\n",
                r.label.to_string(),
                mark(r.iterative),
                mark(r.dcp),
                mark(r.dda),
                100.0 * r.ss_miou,
                100.0 * r.ssc_miou,
                100.0 * r.sc_iou,
                r.reference.ss,
                r.reference.ssc,
                r.reference.sc
            );
        }
        out
    }
}

/// Trains every configuration once per seed on the same data.
///
/// All configurations of a seed share one bootstrap: `A` is scored on the
/// bootstrap predictions, the others continue from a copy of the
/// bootstrapped trainer. Checkpoints go to `ckpt_root/seed{s}/{label}`.
pub fn run_ablation_grid(
    train: &[PreparedSample],
    eval: &[PreparedSample],
    num_labels: usize,
    base: &TrainConfig,
    seeds: &[u64],
    ckpt_root: Option<&Path>,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation grid needs at least one seed".into()));
    }
    let mut per_label: Vec<Vec<MetricsReport>> = vec![Vec::new(); AblationLabel::ALL.len()];
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let dir = |label: AblationLabel| ckpt_root.map(|r| r.join(format!("seed{seed}")).join(label.to_string()));
        let a_dir = dir(AblationLabel::A);
        let mut boot = Trainer::new(train, eval, num_labels, cfg, AblationLabel::A.config(), a_dir.as_deref())?;
        boot.run()?;
        for label in AblationLabel::ALL {
            let report = if label == AblationLabel::A {
                boot.latest().expect("bootstrap recorded").metrics.clone()
            } else {
                let mut t = boot.clone().with_ablation(label.config());
                t.set_checkpoint_dir(dir(label).as_deref());
                t.run()?;
                t.latest().expect("phases recorded").metrics.clone()
            };
            per_label[label as usize].push(report);
        }
    }
    let mean = |v: &[MetricsReport], f: fn(&MetricsReport) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let rows = AblationLabel::ALL
        .into_iter()
        .map(|label| {
            let runs = std::mem::take(&mut per_label[label as usize]);
            let AblationConfig { iterative, dcp, dda, .. } = label.config();
            AblationRow {
                label,
                iterative,
                dcp,
                dda,
                ss_miou: mean(&runs, |m| m.ss.ss_miou),
                ssc_miou: mean(&runs, |m| m.ssc.ssc_miou),
                sc_iou: mean(&runs, |m| m.ssc.sc_iou),
                per_seed: runs,
                reference: reference_row(label),
            }
        })
        .collect();
    Ok(AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seeds: seeds.to_vec(),
        iterations: base.iterations,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub t: usize,
    pub ssc_miou: f64,
    pub ss_miou: f64,
    pub sc_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub t_max: usize,
    /// One point per slice `0..=t_max`, taken from the slice's last record.
    pub points: Vec<SweepPoint>,
    pub records: Vec<EvalRecord>,
    /// Published behaviour, for annotation only.
    pub reference_note: String,
}

pub const SWEEP_REFERENCE_NOTE: &str = "published accuracies of both tasks rise with t and get stable around 3 and 4";

/// Collapses a metrics log to one point per time slice.
pub fn sweep_points(records: &[EvalRecord]) -> Vec<SweepPoint> {
    let mut points: Vec<SweepPoint> = Vec::new();
    for r in records {
        let p = SweepPoint {
            t: r.t,
            ssc_miou: r.metrics.ssc.ssc_miou,
            ss_miou: r.metrics.ss.ss_miou,
            sc_iou: r.metrics.ssc.sc_iou,
        };
        match points.last_mut() {
            Some(last) if last.t == r.t => *last = p,
            _ => points.push(p),
        }
    }
    points
}

/// One training run of `t_max` slices, evaluated after every phase.
pub fn run_iteration_sweep(
    train: &[PreparedSample],
    eval: &[PreparedSample],
    num_labels: usize,
    base: &TrainConfig,
    ablation: AblationConfig,
    t_max: usize,
    ckpt_dir: Option<&Path>,
) -> Result<SweepReport> {
    if t_max == 0 {
        return Err(Error::Config("sweep needs t_max >= 1".into()));
    }
    if !ablation.iterative {
        return Err(Error::Config(format!("ablation {} has no iterations to sweep", ablation.label)));
    }
    let cfg = TrainConfig {
        iterations: t_max,
        ..base.clone()
    };
    let mut trainer = Trainer::new(train, eval, num_labels, cfg, ablation, ckpt_dir)?;
    trainer.run()?;
    Ok(SweepReport {
        schema_version: REPORT_SCHEMA_VERSION,
        t_max,
        points: sweep_points(&trainer.log),
        records: trainer.log,
        reference_note: SWEEP_REFERENCE_NOTE.to_string(),
    })
}
